//! Run configuration, read from TOML. Every key except the three data file
//! paths has a default; relative paths resolve against the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use isfe::equilibrium::{EquilibriumOptions, EquilibriumProblem, StepRule};
use isfe::gcda::UtilityParams;
use isfe::investor::{aggregate_profiles, CapitalCost, LocationCost, QuadraticCost};
use isfe::network::{parse_network, parse_roles, parse_trips, Network, TripTable};
use isfe::stochastic::{generate_scenarios, CaseMode, ScenarioSet};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: CaseMode,
    pub network: NetworkSection,
    #[serde(default)]
    pub utility: UtilitySection,
    #[serde(default)]
    pub costs: CostSection,
    #[serde(default)]
    pub scenarios: ScenarioSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_mode() -> CaseMode {
    CaseMode::Deterministic
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub path: PathBuf,
    pub roles: PathBuf,
    pub trips: PathBuf,
    /// Drop the BPR congestion term (`alpha = 0`) on every link.
    #[serde(default)]
    pub no_congestion: bool,
}

/// A scalar applied to every location, or one value per location.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerLocation<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerLocation<T> {
    fn expand(&self, k: usize, what: &str) -> Result<Vec<T>> {
        match self {
            PerLocation::All(x) => Ok(vec![x.clone(); k]),
            PerLocation::Each(v) if v.len() == k => Ok(v.clone()),
            PerLocation::Each(v) => bail!("{what}: {} values given for {k} candidate locations", v.len()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilitySection {
    pub beta0: PerLocation<f64>,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for UtilitySection {
    fn default() -> Self {
        UtilitySection {
            beta0: PerLocation::All(0.0),
            beta1: 1.0,
            beta2: 0.06,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    /// `[a, b]` of `a c^2 + b c`.
    pub capital: PerLocation<[f64; 2]>,
    pub operating: PerLocation<[f64; 2]>,
    /// Several investors per location, `[[a, b], ...]`, replacing `capital`
    /// by their aggregate.
    pub investors: Option<Vec<[f64; 2]>>,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection {
            capital: PerLocation::All([0.1, 170.0]),
            operating: PerLocation::All([0.1, 130.0]),
            investors: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub count: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub seed: u64,
    /// Explicit scenario set (JSON, as written by `metrics`); overrides the
    /// generated one.
    pub file: Option<PathBuf>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            count: 1,
            theta_min: 1.0,
            theta_max: 1.0,
            seed: 0,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol_mc: f64,
    pub gap_tol: f64,
    pub max_outer: usize,
    pub step_rule: StepRule,
    pub gcda_tol_floor: f64,
    /// Tolerance used by `verify`; defaults to the larger solve tolerance.
    pub verify_tol: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = EquilibriumOptions::default();
        SolverSection {
            tol_mc: d.tol_mc,
            gap_tol: d.gap_tol,
            max_outer: d.max_outer,
            step_rule: d.step_rule,
            gcda_tol_floor: d.gcda_tol_floor,
            verify_tol: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("isfe-out"),
        }
    }
}

/// Network, trips and costs loaded from disk.
pub struct Loaded {
    pub problem: EquilibriumProblem,
    /// Investor profiles shared by every location, when configured.
    pub investors: Option<Vec<QuadraticCost>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        let s = &self.solver;
        if !(s.tol_mc > 0.0 && s.gap_tol > 0.0 && s.gcda_tol_floor > 0.0 && s.verify_tol.map_or(true, |t| t > 0.0)) {
            bail!("solver tolerances must be positive");
        }
        for p in [&self.network.path, &self.network.roles, &self.network.trips] {
            let full = self.resolve(p);
            if !full.is_file() {
                bail!("data file {} does not exist", full.display());
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn read(&self, p: &Path) -> Result<String> {
        let full = self.resolve(p);
        std::fs::read_to_string(&full).with_context(|| format!("cannot read {}", full.display()))
    }

    pub fn scenario_set(&self) -> Result<ScenarioSet> {
        let s = &self.scenarios;
        match &s.file {
            Some(f) => {
                let set: ScenarioSet = serde_json::from_str(&self.read(f)?)
                    .with_context(|| format!("invalid scenario file {}", self.resolve(f).display()))?;
                ScenarioSet::new(set.scenarios().to_vec(), set.seed())
                    .with_context(|| format!("invalid scenario file {}", self.resolve(f).display()))
            }
            None => generate_scenarios(s.count, s.theta_min, s.theta_max, s.seed).context("scenario settings"),
        }
    }

    pub fn verify_tol(&self) -> f64 {
        self.solver
            .verify_tol
            .unwrap_or(self.solver.tol_mc.max(self.solver.gap_tol))
    }

    pub fn options(&self) -> EquilibriumOptions {
        let s = &self.solver;
        EquilibriumOptions {
            tol_mc: s.tol_mc,
            gap_tol: s.gap_tol,
            max_outer: s.max_outer,
            step_rule: s.step_rule,
            gcda_tol_floor: s.gcda_tol_floor,
            ..EquilibriumOptions::default()
        }
    }

    pub fn network(&self) -> Result<Network> {
        let roles = parse_roles(&self.read(&self.network.roles)?)
            .with_context(|| format!("roles file {}", self.network.roles.display()))?;
        let net = parse_network(&self.read(&self.network.path)?, roles)
            .with_context(|| format!("network file {}", self.network.path.display()))?;
        Ok(if self.network.no_congestion {
            net.without_congestion()
        } else {
            net
        })
    }

    /// Builds the problem over `scenarios`.
    pub fn load(&self, scenarios: ScenarioSet) -> Result<Loaded> {
        let net = self.network()?;
        let trips: TripTable = parse_trips(&self.read(&self.network.trips)?, &net)
            .with_context(|| format!("trips file {}", self.network.trips.display()))?;
        let k = net.location_count();
        let u = &self.utility;
        let params = UtilityParams::new(u.beta0.expand(k, "utility.beta0")?, u.beta1, u.beta2)
            .context("utility parameters")?;
        let quad = |x: [f64; 2]| QuadraticCost::new(x[0], x[1]).context("cost coefficients");
        let operating = self.costs.operating.expand(k, "costs.operating")?;
        let investors = match &self.costs.investors {
            Some(list) => Some(list.iter().map(|x| quad(*x)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let capital: Vec<CapitalCost> = match &investors {
            Some(profiles) => {
                let agg = aggregate_profiles(profiles).context("investor profiles")?;
                vec![CapitalCost::Aggregate(agg); k]
            }
            None => self
                .costs
                .capital
                .expand(k, "costs.capital")?
                .into_iter()
                .map(|x| quad(x).map(CapitalCost::from))
                .collect::<Result<_>>()?,
        };
        let costs = capital
            .into_iter()
            .zip(operating)
            .map(|(c, o)| {
                Ok(LocationCost {
                    capital: c,
                    operating: quad(o)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let problem = EquilibriumProblem::new(net, trips, params, costs, scenarios).context("problem setup")?;
        Ok(Loaded { problem, investors })
    }
}
