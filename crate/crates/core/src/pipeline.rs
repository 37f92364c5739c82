//! Stage functions and configuration for the full imaging chain:
//! phantom, simulation, global beamforming, tracking, reconstruction,
//! adaptive beamforming and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beamformer::{envelope, Beamformer, BeamformedFrame, DelayModel, FrameSpec};
use crate::error::{Error, Result};
use crate::forward_sim::{
    make_simulation_phantom, synth_rf_set, Inclusion, Phantom, PhantomConfig, RfChannelData, SynthOptions,
};
use crate::geometry::{
    default_compound_angles, default_sos_angles, AcquisitionSpec, ApodizationSpec, ImagingGrid, Point2,
    ReconGrid, TransducerArray,
};
use crate::metrics::{self, ScattererReport, SweepLabel, SweepRow, DEFAULT_ROI_RADIUS};
use crate::raytrace::{build_differential, AnglePairList, RxEndpointRule};
use crate::recon::{build_regularizer, solve_slowness, RegularizerWeights, SolveReport, SolverOptions};
use crate::slowness::SlownessMap;
use crate::sparse::SparseRayMatrix;
use crate::tracking::{self, DisplacementMap, TrackingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxEndpoint {
    ApertureCentroid,
    FixedAngle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub lambda: f64,
    pub weights: RegularizerWeights,
    pub solver: SolverOptions,
    pub rx_endpoint: RxEndpoint,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: 6.5e-2,
            weights: RegularizerWeights::default(),
            solver: SolverOptions::default(),
            rx_endpoint: RxEndpoint::ApertureCentroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Global sound speeds swept (m/s): `lo, hi, step`.
    pub sweep: (f64, f64, f64),
    pub roi_radius: f64,
    pub dynamic_range_db: f64,
    /// Speed-of-sound display window for map images (m/s).
    pub sos_window: (f64, f64),
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            sweep: (1490.0, 1550.0, 5.0),
            roi_radius: DEFAULT_ROI_RADIUS,
            dynamic_range_db: 50.0,
            sos_window: (1490.0, 1560.0),
        }
    }
}

/// Artifact locations, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub phantom: PathBuf,
    pub rf: PathBuf,
    pub frames: PathBuf,
    pub displacements: PathBuf,
    pub maps: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            phantom: "phantom.json".into(),
            rf: "rf".into(),
            frames: "frames".into(),
            displacements: "displacements".into(),
            maps: "maps".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub array: TransducerArray,
    pub grid: ImagingGrid,
    pub recon_grid: ReconGrid,
    pub acquisition: AcquisitionSpec,
    pub apodization: ApodizationSpec,
    pub phantom: PhantomConfig,
    /// Transmit angles used for speed-of-sound estimation (rad).
    pub sos_angles: Vec<f64>,
    /// Transmit angles coherently compounded for B-mode images (rad).
    pub compound_angles: Vec<f64>,
    pub tracking: TrackingConfig,
    pub recon: ReconConfig,
    pub evaluation: EvaluationConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

/// Default imaging grid: 24 mm x 30 mm at 37.5 um in both directions.
pub fn default_imaging_grid() -> ImagingGrid {
    ImagingGrid::new(641, 801, 37.5e-6, 37.5e-6, Point2::new(-12e-3, 3e-3)).expect("valid default grid")
}

/// Default reconstruction grid: 64 x 64 cells over the array width down to 35.2 mm.
pub fn default_recon_grid() -> ReconGrid {
    ReconGrid::spanning(64, 64, -19.2e-3, 19.2e-3, 0.0, 35.2e-3).expect("valid default grid")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            array: TransducerArray::default(),
            grid: default_imaging_grid(),
            recon_grid: default_recon_grid(),
            acquisition: AcquisitionSpec::default(),
            apodization: ApodizationSpec::default(),
            phantom: PhantomConfig::default(),
            sos_angles: default_sos_angles(),
            compound_angles: default_compound_angles(),
            tracking: TrackingConfig::default(),
            recon: ReconConfig::default(),
            evaluation: EvaluationConfig::default(),
            paths: PathsConfig::default(),
            seed: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.recon_grid.validate()?;
        self.acquisition.validate()?;
        self.apodization.validate()?;
        self.tracking.validate()?;
        if !self.recon_grid.covers(&self.grid) {
            return Err(Error::Config("reconstruction grid does not cover the imaging grid".into()));
        }
        for (name, set) in [("sos", &self.sos_angles), ("compound", &self.compound_angles)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} angle set is empty")));
            }
            if let Some(a) = set.iter().find(|a| self.acquisition.angle_index(**a).is_none()) {
                return Err(Error::Config(format!(
                    "{name} angle {:.3} deg is not among the transmitted angles",
                    a.to_degrees()
                )));
            }
        }
        let (lo, hi, step) = self.evaluation.sweep;
        if !(step > 0.0 && hi >= lo) {
            return Err(Error::Config("sweep range must satisfy lo <= hi and step > 0".into()));
        }
        Ok(())
    }

    pub fn sigma0(&self) -> f64 {
        self.acquisition.slowness()
    }

    pub fn beamformer(&self) -> Result<Beamformer> {
        Beamformer::new(self.grid.clone(), self.array.clone(), self.apodization)
    }

    pub fn rx_rule(&self) -> RxEndpointRule {
        match self.recon.rx_endpoint {
            RxEndpoint::ApertureCentroid => RxEndpointRule::ApertureCentroid {
                array: self.array.clone(),
                apod: self.apodization,
            },
            RxEndpoint::FixedAngle => RxEndpointRule::FixedAngle,
        }
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        let (lo, hi, step) = self.evaluation.sweep;
        metrics::sos_range(lo, hi, step)
    }

    fn indices(&self, set: &[f64]) -> Vec<usize> {
        set.iter()
            .map(|a| self.acquisition.angle_index(*a).expect("validated subset"))
            .collect()
    }

    pub fn compound_indices(&self) -> Vec<usize> {
        self.indices(&self.compound_angles)
    }

    pub fn sos_indices(&self) -> Vec<usize> {
        self.indices(&self.sos_angles)
    }

    pub fn pairs(&self) -> Result<AnglePairList> {
        tracking::default_pairs(&self.sos_angles, &self.tracking)
    }

    pub fn measurement_grid(&self) -> Result<ImagingGrid> {
        self.tracking.measurement_grid(&self.grid)
    }
}

/// Scatterers whose line of sight to the array centre crosses the inclusion
/// and which lie deeper than it.
pub fn below_inclusion(inclusion: &Inclusion, p: Point2) -> bool {
    let c = inclusion.center;
    if p.z <= c.z + inclusion.radius {
        return false;
    }
    let len = p.x.hypot(p.z);
    let distance = (p.x * c.z - p.z * c.x).abs() / len;
    distance < inclusion.radius
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn make_phantom(cfg: &PipelineConfig) -> Result<Phantom> {
    make_simulation_phantom(&cfg.phantom, &cfg.recon_grid, &cfg.grid, cfg.seed)
}

/// Channel data for every transmitted angle.
pub fn simulate(cfg: &PipelineConfig, phantom: &Phantom) -> Result<Vec<RfChannelData>> {
    synth_rf_set(phantom, &cfg.acquisition.angles, &cfg.acquisition, &cfg.array, SynthOptions::default())
}

fn subset(rfs: &[RfChannelData], idx: &[usize]) -> Result<Vec<RfChannelData>> {
    idx.iter()
        .map(|&i| {
            rfs.get(i).cloned().ok_or(Error::IndexOutOfRange {
                what: "RF angle",
                index: i,
                limit: rfs.len(),
            })
        })
        .collect()
}

/// Compounded frame over the compound angle set.
pub fn compound_pass(cfg: &PipelineConfig, rfs: &[RfChannelData], model: &DelayModel) -> Result<BeamformedFrame> {
    let set = subset(rfs, &cfg.compound_indices())?;
    cfg.beamformer()?.compound(&set, model)
}

/// PSF-aligned frame pairs of every tracked pair, beamformed at `sigma0`.
pub fn tracking_frames(
    cfg: &PipelineConfig,
    rfs: &[RfChannelData],
    pairs: &AnglePairList,
) -> Result<Vec<(BeamformedFrame, BeamformedFrame)>> {
    let sos_idx = cfg.sos_indices();
    let mut specs: Vec<FrameSpec> = Vec::new();
    let mut slot = |spec: FrameSpec| -> usize {
        match specs.iter().position(|s| s.rf == spec.rf && s.rx_angle.to_bits() == spec.rx_angle.to_bits()) {
            Some(k) => k,
            None => {
                specs.push(spec);
                specs.len() - 1
            }
        }
    };
    let mut wiring = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.pairs().iter().enumerate() {
        let ((_, ri), (_, rj)) = pairs.steering(k, cfg.tracking.acceptance)?;
        let a = slot(FrameSpec { rf: sos_idx[p.i], rx_angle: ri });
        let b = slot(FrameSpec { rf: sos_idx[p.j], rx_angle: rj });
        wiring.push((a, b));
    }
    let frames = cfg
        .beamformer()?
        .frames(rfs, &specs, &DelayModel::Global { slowness: cfg.sigma0() })?;
    Ok(wiring
        .into_iter()
        .map(|(a, b)| (frames[a].clone(), frames[b].clone()))
        .collect())
}

/// Projected and scaled displacement map per pair.
pub fn track(
    cfg: &PipelineConfig,
    pairs: &AnglePairList,
    frames: &[(BeamformedFrame, BeamformedFrame)],
) -> Result<Vec<DisplacementMap>> {
    if frames.len() != pairs.len() {
        return Err(Error::Dimension("one frame pair per angle pair is required".into()));
    }
    frames
        .iter()
        .zip(pairs.pairs())
        .map(|((a, b), p)| {
            let raw = tracking::ncc_displacement(&cfg.grid, &a.values, &b.values, &cfg.tracking, cfg.sigma0())?;
            Ok(tracking::project_and_scale(&raw, p.psf_angle, &cfg.tracking))
        })
        .collect()
}

/// Differential path matrix on the measurement grid.
pub fn differential_matrix(cfg: &PipelineConfig, pairs: &AnglePairList) -> Result<SparseRayMatrix> {
    build_differential(
        pairs,
        &cfg.rx_rule(),
        &cfg.recon_grid,
        &cfg.measurement_grid()?,
        cfg.tracking.acceptance,
    )
}

pub fn solve(
    cfg: &PipelineConfig,
    l: &SparseRayMatrix,
    delays: &[f64],
    mask: &[bool],
) -> Result<(SlownessMap, SolveReport)> {
    let reg = build_regularizer(&cfg.recon_grid, cfg.recon.weights, cfg.recon.lambda)?;
    solve_slowness(l, delays, mask, &reg, cfg.sigma0(), &cfg.recon_grid, &cfg.recon.solver)
}

pub fn reconstruct(
    cfg: &PipelineConfig,
    pairs: &AnglePairList,
    maps: &[DisplacementMap],
) -> Result<(SlownessMap, SolveReport)> {
    let (delays, mask) = tracking::build_measurement_vector(maps, pairs)?;
    let l = differential_matrix(cfg, pairs)?;
    if l.rows() != delays.len() {
        return Err(Error::Dimension(format!(
            "displacements have {} entries, the differential matrix {} rows",
            delays.len(),
            l.rows()
        )));
    }
    solve(cfg, &l, &delays, &mask)
}

/// Sweep of global sound speeds plus the adaptive map, on the point targets.
pub fn evaluate(
    cfg: &PipelineConfig,
    rfs: &[RfChannelData],
    phantom: &Phantom,
    adaptive: Option<&SlownessMap>,
) -> Result<Vec<SweepRow>> {
    let set = subset(rfs, &cfg.compound_indices())?;
    let truths: Vec<Point2> = phantom.scatterers.iter().map(|s| s.position).collect();
    metrics::sweep_global_sos(
        &cfg.beamformer()?,
        &set,
        &cfg.sweep_values(),
        adaptive,
        &truths,
        cfg.evaluation.roi_radius,
    )
}

/// Point-target metrics of an already beamformed frame.
pub fn score_frame(cfg: &PipelineConfig, frame: &BeamformedFrame, phantom: &Phantom, label: SweepLabel) -> Result<SweepRow> {
    let truths: Vec<Point2> = phantom.scatterers.iter().map(|s| s.position).collect();
    Ok(SweepRow {
        label,
        reports: metrics::evaluate_scatterers(&envelope(frame)?, &truths, cfg.evaluation.roi_radius),
    })
}

/// Selection used for summaries: scatterers below the inclusion when there
/// is one, all scatterers otherwise.
pub fn summary_selection(phantom: &Phantom) -> impl Fn(&ScattererReport) -> bool + '_ {
    move |r: &ScattererReport| match &phantom.inclusion {
        Some(inc) if inc.radius > 0.0 => below_inclusion(inc, r.truth),
        _ => true,
    }
}

// ---------------------------------------------------------------------------
// Artifact IO
// ---------------------------------------------------------------------------

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn rf_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("angle_{index:02}.rf"))
}

pub fn write_rf_set(dir: &Path, rfs: &[RfChannelData]) -> Result<()> {
    ensure_dir(dir)?;
    for (k, rf) in rfs.iter().enumerate() {
        rf.write(&rf_path(dir, k))?;
    }
    Ok(())
}

pub fn read_rf_set(dir: &Path, count: usize) -> Result<Vec<RfChannelData>> {
    (0..count).map(|k| RfChannelData::read(&rf_path(dir, k))).collect()
}

/// Frame container, envelope PGM and envelope CSV for one compound frame.
pub fn write_frame_set(dir: &Path, name: &str, frame: &BeamformedFrame, dynamic_range: f64) -> Result<()> {
    ensure_dir(dir)?;
    frame.write(&dir.join(format!("{name}.frame")))?;
    let env = envelope(frame)?;
    env.write_csv(&dir.join(format!("{name}_envelope.csv")))?;
    if env.max() > 0.0 {
        env.write_pgm(&dir.join(format!("{name}.pgm")), dynamic_range)?;
    }
    Ok(())
}

pub fn write_displacements(dir: &Path, maps: &[DisplacementMap]) -> Result<()> {
    ensure_dir(dir)?;
    for (k, m) in maps.iter().enumerate() {
        m.write_csv(&dir.join(format!("pair_{k:02}.csv")))?;
        m.write_quality_pgm(&dir.join(format!("pair_{k:02}_quality.pgm")))?;
        let json = serde_json::to_string(m).map_err(|e| Error::format(dir, e.to_string()))?;
        let p = dir.join(format!("pair_{k:02}.json"));
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_displacements(dir: &Path, count: usize) -> Result<Vec<DisplacementMap>> {
    (0..count)
        .map(|k| {
            let p = dir.join(format!("pair_{k:02}.json"));
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
        })
        .collect()
}

pub fn write_map(dir: &Path, map: &SlownessMap, report: &SolveReport, window: (f64, f64)) -> Result<()> {
    ensure_dir(dir)?;
    map.write_sos_csv(&dir.join("sos.csv"))?;
    map.write_sos_pgm(&dir.join("sos.pgm"), window)?;
    let p = dir.join("solve_report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(&p, e.to_string()))?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

pub fn write_reports(dir: &Path, rows: &[SweepRow], phantom: &Phantom) -> Result<String> {
    ensure_dir(dir)?;
    let select = summary_selection(phantom);
    metrics::write_summary_csv(&dir.join("sweep_summary.csv"), rows, &select)?;
    metrics::write_detail_csv(&dir.join("sweep_detail.csv"), rows)?;
    let table = metrics::table_summary(rows, &select);
    let p = dir.join("summary.md");
    fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    Ok(table)
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub phantom: Phantom,
    pub map: SlownessMap,
    pub report: SolveReport,
    pub rows: Vec<SweepRow>,
    pub table: String,
}

/// Run every stage in order and write all artifacts below `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    ensure_dir(out)?;
    let p = &cfg.paths;
    let clock = std::time::Instant::now();
    let lap = |stage: &str| log::info!("{stage} done at {:.1} s", clock.elapsed().as_secs_f64());
    let phantom = make_phantom(cfg)?;
    phantom.write_json(&out.join(&p.phantom))?;
    log::info!("phantom: {} point targets, {} speckle", phantom.scatterers.len(), phantom.speckle.len());

    let rfs = simulate(cfg, &phantom)?;
    write_rf_set(&out.join(&p.rf), &rfs)?;
    lap("simulation");
    log::info!("simulated {} plane waves", rfs.len());

    let global = compound_pass(cfg, &rfs, &DelayModel::Global { slowness: cfg.sigma0() })?;
    write_frame_set(&out.join(&p.frames), "global", &global, cfg.evaluation.dynamic_range_db)?;
    lap("global pass");

    let pairs = cfg.pairs()?;
    let frames = tracking_frames(cfg, &rfs, &pairs)?;
    let maps = track(cfg, &pairs, &frames)?;
    drop(frames);
    write_displacements(&out.join(&p.displacements), &maps)?;
    lap("tracking");
    log::info!(
        "tracked {} pairs, {} valid measurements",
        maps.len(),
        maps.iter().map(|m| m.valid_count()).sum::<usize>()
    );

    let (map, report) = reconstruct(cfg, &pairs, &maps)?;
    write_map(&out.join(&p.maps), &map, &report, cfg.evaluation.sos_window)?;
    lap("reconstruction");
    log::info!("reconstruction: {} iterations, objective {:.4e}", report.iterations, report.objective.total);

    let adaptive = compound_pass(cfg, &rfs, &DelayModel::adaptive(map.clone()))?;
    write_frame_set(&out.join(&p.frames), "adaptive", &adaptive, cfg.evaluation.dynamic_range_db)?;
    lap("adaptive pass");

    let mut rows = evaluate(cfg, &rfs, &phantom, None)?;
    rows.push(score_frame(cfg, &adaptive, &phantom, SweepLabel::Adaptive)?);
    let table = write_reports(&out.join(&p.reports), &rows, &phantom)?;
    lap("evaluation");
    Ok(PipelineOutput {
        phantom,
        map,
        report,
        rows,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.grid, cfg.grid);
    }

    #[test]
    fn below_inclusion_selects_shadowed_targets() {
        let inc = PhantomConfig::default().inclusion.unwrap();
        assert!(below_inclusion(&inc, Point2::new(2e-3, 24e-3)));
        assert!(below_inclusion(&inc, Point2::new(-6e-3, 30e-3)));
        assert!(!below_inclusion(&inc, Point2::new(10e-3, 24e-3)));
        assert!(!below_inclusion(&inc, Point2::new(2e-3, 12e-3)));
        let cfg = PipelineConfig::default();
        let n = cfg
            .phantom
            .scatterers
            .axial
            .iter()
            .flat_map(|&z| cfg.phantom.scatterers.lateral.iter().map(move |&x| Point2::new(x, z)))
            .filter(|&p| below_inclusion(&inc, p))
            .count();
        assert_eq!(n, 10);
    }

    #[test]
    fn rejects_angle_outside_transmit_set() {
        let mut cfg = PipelineConfig::default();
        cfg.sos_angles.push(3f64.to_radians());
        assert!(cfg.validate().is_err());
    }
}
