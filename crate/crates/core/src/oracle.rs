//! The QoR evaluation boundary: a budget-metered evaluator contract, a
//! deterministic synthetic PPA response-surface model for desk-scale
//! experiments, a table-backed oracle for exact replay, and the derived
//! performance/PPA report metrics.

use std::collections::HashMap;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::design_space::{csv_error, CandidateValue, Configuration, DesignSpace};
use crate::error::{Error, Result};
use crate::pareto::QoRVector;
use crate::rng::{fnv1a, mix};

/// Online evaluation budget matching the experiment protocol default.
pub const DEFAULT_BUDGET: u64 = 256;

/// Atomic invocation counter with a hard limit. Check-and-increment is a
/// single atomic step, so concurrent callers cannot overshoot the budget.
#[derive(Debug)]
pub struct Meter {
    limit: u64,
    used: AtomicU64,
}

impl Meter {
    pub fn new(limit: u64) -> Meter {
        Meter {
            limit,
            used: AtomicU64::new(0),
        }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.limit.saturating_sub(self.used())
    }

    pub fn charge(&self) -> Result<()> {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                (u < self.limit).then_some(u + 1)
            })
            .map(|_| ())
            .map_err(|_| Error::BudgetExhausted { budget: self.limit })
    }
}

/// Something that can label a configuration with QoR metrics.
///
/// `evaluate` charges the budget meter only after the underlying model
/// succeeds, so the counter equals the number of successful calls.
/// `evaluate_unmetered` is the offline-labeling path, exempt from the online
/// budget by design.
pub trait QoREvaluator: Send + Sync {
    fn evaluate_unmetered(&self, config: &Configuration) -> Result<QoRVector>;

    fn meter(&self) -> &Meter;

    fn evaluate(&self, config: &Configuration) -> Result<QoRVector> {
        let q = self.evaluate_unmetered(config)?;
        self.meter().charge()?;
        Ok(q)
    }
}

/// Coefficients of the synthetic PPA model. The defaults are calibrated so
/// the valid space exhibits genuine performance/power/area trade-offs (no
/// parameter improves all three objectives at once) and a Pareto front of
/// dozens of points.
#[derive(Debug, Clone)]
pub struct SyntheticOracleParams {
    pub seed: u64,
    /// Relative amplitude of the deterministic per-config noise; 0 disables.
    pub noise_amplitude: f64,
    /// Timing model intercept and clock-target slope, picoseconds.
    pub base_intercept_ps: f64,
    pub base_slope_ps_per_ns: f64,
    /// Wire-delay growth per log array extent.
    pub wire_coeff: f64,
    /// Watts per MAC unit at 1 GHz-equivalent activity.
    pub power_scale: f64,
    /// µm² per MAC unit before utilization division.
    pub area_scale: f64,
}

impl Default for SyntheticOracleParams {
    fn default() -> Self {
        SyntheticOracleParams {
            seed: 0,
            noise_amplitude: 0.02,
            base_intercept_ps: 240.0,
            base_slope_ps_per_ns: 370.0,
            wire_coeff: 0.12,
            power_scale: 2.0e-4,
            area_scale: 550.0,
        }
    }
}

/// Deterministic analytic PPA model over the built-in design space. Noise is
/// a hash of (seed, config), not a sample, so the same configuration always
/// yields the same QoRVector in any process.
#[derive(Debug)]
pub struct SyntheticOracle {
    space: DesignSpace,
    params: SyntheticOracleParams,
    meter: Meter,
}

/// Tile/mesh product along one axis of the array.
fn array_dim(space: &DesignSpace, config: &Configuration, tile: &str, mesh: &str) -> f64 {
    let v = |name: &str| {
        let slot = space.slot_of(name).expect("built-in parameter");
        space
            .value_of(config, slot)
            .as_f64()
            .expect("numeric parameter")
    };
    v(tile) * v(mesh)
}

/// Total MAC units in the systolic array.
pub fn mac_count(space: &DesignSpace, config: &Configuration) -> f64 {
    array_dim(space, config, "tile_row", "mesh_row")
        * array_dim(space, config, "tile_column", "mesh_column")
}

impl SyntheticOracle {
    pub fn new(params: SyntheticOracleParams, budget: u64) -> SyntheticOracle {
        SyntheticOracle {
            space: DesignSpace::builtin(),
            params,
            meter: Meter::new(budget),
        }
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    fn f64_of(&self, config: &Configuration, name: &str) -> f64 {
        let slot = self.space.slot_of(name).expect("built-in parameter");
        self.space
            .value_of(config, slot)
            .as_f64()
            .expect("numeric parameter")
    }

    fn token_of<'a>(&'a self, config: &Configuration, name: &str) -> &'a str {
        let slot = self.space.slot_of(name).expect("built-in parameter");
        match self.space.value_of(config, slot) {
            CandidateValue::Token(s) => s,
            other => panic!("parameter {name} is not a token: {other:?}"),
        }
    }

    fn bool_of(&self, config: &Configuration, name: &str) -> bool {
        let slot = self.space.slot_of(name).expect("built-in parameter");
        match self.space.value_of(config, slot) {
            CandidateValue::Bool(b) => *b,
            other => panic!("parameter {name} is not a boolean: {other:?}"),
        }
    }

    /// Deterministic noise in [−amplitude, +amplitude], hashed from
    /// (seed, tag, choices). Pure arithmetic — stable across processes.
    fn noise(&self, config: &Configuration, tag: &str) -> f64 {
        if self.params.noise_amplitude == 0.0 {
            return 0.0;
        }
        let mut bytes = Vec::with_capacity(8 + tag.len() + self.space.n_params());
        bytes.extend_from_slice(&self.params.seed.to_le_bytes());
        bytes.extend_from_slice(tag.as_bytes());
        bytes.extend(config.choices().iter().map(|&c| c as u8));
        let u = (mix(fnv1a(&bytes)) >> 11) as f64 / (1u64 << 53) as f64;
        self.params.noise_amplitude * (2.0 * u - 1.0)
    }

    /// Critical-path estimate in picoseconds, before noise.
    ///
    /// Every multiplicative factor stays within [0.9, 1.6] and their product
    /// under 2.7, which keeps the clock-relaxation slope below 1000 ps per
    /// ns of target relaxation (the slope contract tested below).
    fn clean_timing_ps(&self, config: &Configuration) -> f64 {
        let p = &self.params;
        let clock = self.f64_of(config, "target_clock_period_ns");
        let base = p.base_intercept_ps + p.base_slope_ps_per_ns * clock;

        let dim_r = array_dim(&self.space, config, "tile_row", "mesh_row");
        let dim_c = array_dim(&self.space, config, "tile_column", "mesh_column");
        let wire = 1.0 + p.wire_coeff * (1.0 + (dim_r + dim_c) / 8.0).ln();

        let util = self.f64_of(config, "place_utilization");
        let congestion = 1.0 + 0.25 * (util - 0.3);

        let density = self.f64_of(config, "place_glo_max_density");
        let relief = 1.08 - 0.15 * (density - 0.3);
        let uniform = if self.bool_of(config, "place_glo_uniform_density") {
            1.02
        } else {
            1.0
        };

        let effort = self.effort_speed_factor(config);
        base * wire * congestion * relief * uniform * effort
    }

    fn effort_speed_factor(&self, config: &Configuration) -> f64 {
        let generic = match self.token_of(config, "syn_generic_effort") {
            "none" => 1.06,
            "low" => 1.03,
            "medium" => 1.0,
            "high" => 0.97,
            other => panic!("unknown syn_generic_effort {other}"),
        };
        let map = match self.token_of(config, "syn_map_effort") {
            "none" => 1.05,
            "low" => 1.02,
            "medium" => 1.0,
            "high" => 0.98,
            "express" => 1.07,
            other => panic!("unknown syn_map_effort {other}"),
        };
        let opt = match self.token_of(config, "syn_opt_effort") {
            "none" => 1.06,
            "low" => 1.03,
            "medium" => 1.0,
            "high" => 0.97,
            "express" => 1.08,
            "extreme" => 0.95,
            other => panic!("unknown syn_opt_effort {other}"),
        };
        let timing = match self.token_of(config, "place_glo_timing_effort") {
            "medium" => 1.0,
            "high" => 0.97,
            other => panic!("unknown place_glo_timing_effort {other}"),
        };
        let cong = match self.token_of(config, "place_glo_cong_effort") {
            "auto" => 1.0,
            "low" => 1.02,
            "medium" => 0.99,
            "high" => 0.97,
            other => panic!("unknown place_glo_cong_effort {other}"),
        };
        let block = match self.token_of(config, "place_glo_auto_block_in_chan") {
            "none" => 1.0,
            "soft" => 0.99,
            "partial" => 0.985,
            other => panic!("unknown place_glo_auto_block_in_chan {other}"),
        };
        let ungroup = if self.bool_of(config, "auto_ungroup") {
            0.99
        } else {
            1.0
        };
        let power_driven = if self.bool_of(config, "place_det_act_power_driven") {
            1.015
        } else {
            1.0
        };
        generic * map * opt * timing * cong * block * ungroup * power_driven
    }

    /// Knobs that buy timing cost power; power-driven placement saves it.
    fn power_efficiency_factor(&self, config: &Configuration) -> f64 {
        let opt = match self.token_of(config, "syn_opt_effort") {
            "none" => 0.97,
            "low" => 0.99,
            "medium" => 1.0,
            "high" => 1.03,
            "express" => 0.98,
            "extreme" => 1.06,
            other => panic!("unknown syn_opt_effort {other}"),
        };
        let timing = match self.token_of(config, "place_glo_timing_effort") {
            "medium" => 1.0,
            "high" => 1.05,
            other => panic!("unknown place_glo_timing_effort {other}"),
        };
        let power_driven = if self.bool_of(config, "place_det_act_power_driven") {
            0.92
        } else {
            1.0
        };
        let uniform = if self.bool_of(config, "place_glo_uniform_density") {
            0.97
        } else {
            1.0
        };
        opt * timing * power_driven * uniform
    }

    fn area_factor(&self, config: &Configuration) -> f64 {
        let density = self.f64_of(config, "place_glo_max_density");
        let spread = 1.0 + 0.3 * (0.7 - density);
        let ungroup = if self.bool_of(config, "auto_ungroup") {
            0.98
        } else {
            1.0
        };
        let block = match self.token_of(config, "place_glo_auto_block_in_chan") {
            "none" => 1.0,
            "soft" => 1.005,
            "partial" => 1.01,
            other => panic!("unknown place_glo_auto_block_in_chan {other}"),
        };
        spread * ungroup * block
    }

    /// Timing with the deterministic noise applied, picoseconds.
    pub fn timing_ps(&self, config: &Configuration) -> Result<f64> {
        if !self.space.is_valid(config) {
            return Err(Error::InvalidConfig(format!(
                "configuration violates design rules: {}",
                self.space.describe(config)
            )));
        }
        Ok(self.clean_timing_ps(config) * (1.0 + self.noise(config, "timing")))
    }
}

impl QoREvaluator for SyntheticOracle {
    fn evaluate_unmetered(&self, config: &Configuration) -> Result<QoRVector> {
        let timing = self.timing_ps(config)?;
        let macs = mac_count(&self.space, config);
        let performance = macs / timing;

        let p = &self.params;
        let power = p.power_scale
            * macs
            * (1000.0 / timing)
            * self.power_efficiency_factor(config)
            * (1.0 + self.noise(config, "power"));

        let util = self.f64_of(config, "place_utilization");
        let area = p.area_scale * macs / util
            * self.area_factor(config)
            * (1.0 + self.noise(config, "area"));

        let q = QoRVector {
            performance,
            power,
            area,
        };
        q.validate()?;
        Ok(q)
    }

    fn meter(&self) -> &Meter {
        &self.meter
    }
}

/// Performance figure for a square array: dim²/timing.
pub fn perf_metric(dim: u64, timing_ps: f64) -> Result<f64> {
    if dim == 0 {
        return Err(Error::Oracle("array dimension must be at least 1".into()));
    }
    if !(timing_ps > 0.0) || !timing_ps.is_finite() {
        return Err(Error::Oracle(format!(
            "timing must be positive and finite, got {timing_ps}"
        )));
    }
    Ok((dim * dim) as f64 / timing_ps)
}

/// Aggregate trade-off figure: perf²/(power × area).
pub fn ppa_tradeoff(perf: f64, power: f64, area: f64) -> Result<f64> {
    if !(power > 0.0) || !(area > 0.0) || !power.is_finite() || !area.is_finite() {
        return Err(Error::Oracle(format!(
            "power and area must be positive and finite, got {power} and {area}"
        )));
    }
    Ok(perf * perf / (power * area))
}

/// Precomputed labels keyed by configuration, for exact replay runs.
#[derive(Debug)]
pub struct TableOracle {
    space: DesignSpace,
    table: HashMap<Configuration, QoRVector>,
    meter: Meter,
}

/// Column names following the 16 parameter columns in a label CSV.
pub const LABEL_COLUMNS: [&str; 3] = ["performance", "power_w", "area_um2"];

/// Write a label table: 16 parameter literal columns, then QoR columns.
pub fn save_table<W: io::Write>(
    space: &DesignSpace,
    items: &[(Configuration, QoRVector)],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = space
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .chain(LABEL_COLUMNS)
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for (config, qor) in items {
        let row: Vec<String> = space
            .params()
            .iter()
            .zip(config.choices())
            .map(|(p, &c)| p.candidates[c].literal())
            .chain([
                format!("{:?}", qor.performance),
                format!("{:?}", qor.power),
                format!("{:?}", qor.area),
            ])
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a label table preserving row order. Duplicate configurations are
/// rejected with the 1-based line numbers of both occurrences.
pub fn load_table_rows<R: io::Read>(
    space: &DesignSpace,
    reader: R,
) -> Result<Vec<(Configuration, QoRVector)>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(csv_error)?.clone();
    let expected: Vec<&str> = space
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .chain(LABEL_COLUMNS)
        .collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            location: "label CSV header".into(),
            message: format!("expected columns {expected:?}, got {got:?}"),
        });
    }
    let n = space.n_params();
    let mut rows = Vec::new();
    let mut first_line: HashMap<Configuration, usize> = HashMap::new();
    for (idx, record) in r.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(csv_error)?;
        if record.len() != n + 3 {
            return Err(Error::Parse {
                location: format!("label CSV row {line}"),
                message: format!("expected {} fields, got {}", n + 3, record.len()),
            });
        }
        let mut choices = Vec::with_capacity(n);
        for (slot, field) in record.iter().take(n).enumerate() {
            choices.push(space.literal_to_choice(slot, field)?);
        }
        let config = space.config(choices)?;
        let mut qor = [0.0f64; 3];
        for (k, field) in record.iter().skip(n).enumerate() {
            qor[k] = field.parse().map_err(|e| Error::Parse {
                location: format!("label CSV row {line}, column {}", LABEL_COLUMNS[k]),
                message: format!("{e}"),
            })?;
        }
        if let Some(&first) = first_line.get(&config) {
            return Err(Error::DuplicateKey {
                first,
                second: line,
            });
        }
        first_line.insert(config.clone(), line);
        rows.push((
            config,
            QoRVector {
                performance: qor[0],
                power: qor[1],
                area: qor[2],
            },
        ));
    }
    Ok(rows)
}

impl TableOracle {
    pub fn load<R: io::Read>(space: &DesignSpace, reader: R, budget: u64) -> Result<TableOracle> {
        let rows = load_table_rows(space, reader)?;
        Ok(TableOracle {
            space: space.clone(),
            table: rows.into_iter().collect(),
            meter: Meter::new(budget),
        })
    }

    pub fn load_from_path(space: &DesignSpace, path: &Path, budget: u64) -> Result<TableOracle> {
        let file = std::fs::File::open(path)?;
        TableOracle::load(space, io::BufReader::new(file), budget)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl QoREvaluator for TableOracle {
    fn evaluate_unmetered(&self, config: &Configuration) -> Result<QoRVector> {
        self.table.get(config).copied().ok_or_else(|| {
            Error::UnknownConfig(format!(
                "no precomputed label for {}",
                self.space.describe(config)
            ))
        })
    }

    fn meter(&self) -> &Meter {
        &self.meter
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pareto::{pareto_front, Bounds};
    use crate::rng::rng_for;

    fn noiseless() -> SyntheticOracle {
        SyntheticOracle::new(
            SyntheticOracleParams {
                noise_amplitude: 0.0,
                ..SyntheticOracleParams::default()
            },
            u64::MAX,
        )
    }

    /// All (tile_row, tile_col, mesh_row, mesh_col, clock) combinations with
    /// the remaining parameters pinned mid-range; invalid ones skipped.
    fn architecture_scan(oracle: &SyntheticOracle) -> Vec<Configuration> {
        let space = oracle.space();
        let base: Vec<usize> = vec![0, 0, 0, 0, 0, 2, 2, 2, 0, 2, 2, 0, 1, 0, 1, 0];
        let mut out = Vec::new();
        for tr in 0..5 {
            for tc in 0..5 {
                for mr in 0..5 {
                    for mc in 0..5 {
                        for clk in 0..7 {
                            let mut ch = base.clone();
                            ch[0] = tr;
                            ch[1] = tc;
                            ch[2] = mr;
                            ch[3] = mc;
                            ch[4] = clk;
                            let cfg = space.config(ch).unwrap();
                            if space.is_valid(&cfg) {
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn same_config_and_seed_give_identical_qor() {
        let a = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let b = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let mut rng = rng_for(20, "oracle-det");
        for _ in 0..50 {
            let cfg = a.space().legalize(&a.space().random_config(&mut rng));
            let qa = a.evaluate(&cfg).unwrap();
            let qb = b.evaluate(&cfg).unwrap();
            assert_eq!(qa, qb);
            // Same instance again, too.
            assert_eq!(qa, a.evaluate(&cfg).unwrap());
        }
        // A different seed changes the noise, hence the outputs.
        let c = SyntheticOracle::new(
            SyntheticOracleParams {
                seed: 7,
                ..SyntheticOracleParams::default()
            },
            u64::MAX,
        );
        let cfg = a.space().legalize(&a.space().random_config(&mut rng));
        assert_ne!(a.evaluate(&cfg).unwrap(), c.evaluate(&cfg).unwrap());
    }

    #[test]
    fn noiseless_performance_is_macs_over_timing() {
        let oracle = noiseless();
        let mut rng = rng_for(21, "oracle-perf");
        for _ in 0..100 {
            let cfg = oracle.space().random_config(&mut rng);
            let cfg = oracle.space().legalize(&cfg);
            let q = oracle.evaluate_unmetered(&cfg).unwrap();
            let timing = oracle.timing_ps(&cfg).unwrap();
            let macs = mac_count(oracle.space(), &cfg);
            assert_eq!(q.performance, macs / timing);
        }
    }

    #[test]
    fn invalid_config_is_rejected_without_spending_budget() {
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), 10);
        let space = oracle.space();
        // tile_row 16 > mesh_row 1 violates the coupling rule.
        let cfg = space
            .config(vec![4, 0, 0, 0, 0, 0, 0, 0, 0, 2, 2, 0, 0, 0, 0, 0])
            .unwrap();
        assert!(!space.is_valid(&cfg));
        assert!(matches!(
            oracle.evaluate(&cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert_eq!(oracle.meter().used(), 0);
    }

    #[test]
    fn budget_enforced_and_counter_matches_successes() {
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), 5);
        let mut rng = rng_for(22, "oracle-budget");
        let space = oracle.space();
        for _ in 0..5 {
            let cfg = space.legalize(&space.random_config(&mut rng));
            oracle.evaluate(&cfg).unwrap();
        }
        assert_eq!(oracle.meter().used(), 5);
        assert_eq!(oracle.meter().remaining(), 0);
        let cfg = space.legalize(&space.random_config(&mut rng));
        match oracle.evaluate(&cfg) {
            Err(Error::BudgetExhausted { budget }) => assert_eq!(budget, 5),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert_eq!(oracle.meter().used(), 5);
        // The unmetered path still works (offline labeling).
        oracle.evaluate_unmetered(&cfg).unwrap();
        assert_eq!(oracle.meter().used(), 5);
    }

    #[test]
    fn responses_positive_over_architecture_scan() {
        let oracle = noiseless();
        let noisy = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let scan = architecture_scan(&oracle);
        assert!(scan.len() > 1000, "scan unexpectedly small: {}", scan.len());
        for cfg in &scan {
            for o in [&oracle, &noisy] {
                let q = o.evaluate_unmetered(cfg).unwrap();
                assert!(q.performance > 0.0 && q.power > 0.0 && q.area > 0.0);
            }
        }
    }

    #[test]
    fn growing_the_array_never_shrinks_power_or_area() {
        let oracle = noiseless();
        let space = oracle.space();
        let scan = architecture_scan(&oracle);
        // Bump each architecture slot to the next candidate; stay valid.
        for cfg in &scan {
            for slot in 0..4 {
                let mut ch = cfg.choices().to_vec();
                if ch[slot] + 1 >= 5 {
                    continue;
                }
                ch[slot] += 1;
                let bigger = space.config(ch).unwrap();
                if !space.is_valid(&bigger) {
                    continue;
                }
                let q0 = oracle.evaluate_unmetered(cfg).unwrap();
                let q1 = oracle.evaluate_unmetered(&bigger).unwrap();
                assert!(q1.area > q0.area, "area must grow with the array");
                assert!(q1.power > q0.power, "power must grow with the array");
            }
        }
    }

    #[test]
    fn clock_relaxation_slows_timing_but_boundedly() {
        let oracle = noiseless();
        let space = oracle.space();
        let clock_slot = space.slot_of("target_clock_period_ns").unwrap();
        for cfg in architecture_scan(&oracle) {
            let c0 = space.value_of(&cfg, clock_slot).as_f64().unwrap();
            let mut ch = cfg.choices().to_vec();
            if ch[clock_slot] + 1 >= 7 {
                continue;
            }
            ch[clock_slot] += 1;
            let relaxed = space.config(ch).unwrap();
            let c1 = space.value_of(&relaxed, clock_slot).as_f64().unwrap();
            let t0 = oracle.timing_ps(&cfg).unwrap();
            let t1 = oracle.timing_ps(&relaxed).unwrap();
            assert!(t1 > t0, "relaxing the target must not speed timing up");
            let relaxation_ps = (c1 - c0) * 1000.0;
            assert!(
                t1 - t0 <= relaxation_ps,
                "timing grew {} ps for {} ps of relaxation",
                t1 - t0,
                relaxation_ps
            );
        }
    }

    #[test]
    fn perf_metric_reference_values() {
        assert!((perf_metric(16, 386.8).unwrap() - 0.662).abs() < 1e-3);
        assert!((perf_metric(8, 751.7).unwrap() - 0.085).abs() < 1e-3);
        assert_eq!(perf_metric(1, 1.0).unwrap(), 1.0);
        assert!(perf_metric(16, 0.0).is_err());
        assert!(perf_metric(16, -1.0).is_err());
        assert!(perf_metric(0, 1.0).is_err());
    }

    #[test]
    fn ppa_tradeoff_reference_values() {
        let v = ppa_tradeoff(0.662, 130.6e-3, 2.83e5).unwrap();
        assert!((v - 1.19e-5).abs() < 0.01e-5, "got {v}");
        let v = ppa_tradeoff(0.652, 148.0e-3, 5.97e5).unwrap();
        assert!((v - 0.48e-5).abs() < 0.01e-5, "got {v}");
        // Quadratic numerator.
        let base = ppa_tradeoff(0.5, 0.1, 1e5).unwrap();
        let doubled = ppa_tradeoff(1.0, 0.1, 1e5).unwrap();
        assert!((doubled / base - 4.0).abs() < 1e-12);
        assert!(ppa_tradeoff(0.5, 0.0, 1e5).is_err());
        assert!(ppa_tradeoff(0.5, 0.1, -1.0).is_err());
    }

    #[test]
    fn valid_space_has_a_rich_pareto_front() {
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let space = oracle.space();
        let mut rng = rng_for(23, "oracle-front");
        let mut seen = std::collections::HashSet::new();
        let mut qors = Vec::new();
        let mut configs = Vec::new();
        while configs.len() < 20_000 {
            let cfg = space.legalize(&space.random_config(&mut rng));
            if !seen.insert(cfg.clone()) {
                continue;
            }
            qors.push(oracle.evaluate_unmetered(&cfg).unwrap());
            configs.push(cfg);
        }
        let bounds = Bounds::from_qors(&qors).unwrap();
        let normalized: Vec<_> = qors.iter().map(|q| bounds.normalize(q)).collect();
        let front = pareto_front(&normalized);
        assert!(
            front.len() >= 20,
            "expected a rich trade-off surface, front has {} points",
            front.len()
        );
        // The front is not carried by a single knob setting: both the clock
        // target and the array extent vary across it.
        let clock_slot = space.slot_of("target_clock_period_ns").unwrap();
        let clocks: std::collections::HashSet<usize> = front
            .iter()
            .map(|&i| configs[i].choice(clock_slot))
            .collect();
        let dims: std::collections::HashSet<u64> = front
            .iter()
            .map(|&i| mac_count(space, &configs[i]) as u64)
            .collect();
        assert!(clocks.len() >= 2, "front pinned to one clock target");
        assert!(dims.len() >= 3, "front pinned to one array size");
    }

    #[test]
    fn table_roundtrip_and_unknown_lookup() {
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let space = oracle.space();
        let mut rng = rng_for(24, "table");
        let mut seen = std::collections::HashSet::new();
        let mut items = Vec::new();
        while items.len() < 50 {
            let cfg = space.legalize(&space.random_config(&mut rng));
            if !seen.insert(cfg.clone()) {
                continue;
            }
            let q = oracle.evaluate_unmetered(&cfg).unwrap();
            items.push((cfg, q));
        }
        let mut buf = Vec::new();
        save_table(space, &items, &mut buf).unwrap();
        let table = TableOracle::load(space, buf.as_slice(), 100).unwrap();
        assert_eq!(table.len(), 50);
        for (cfg, q) in &items {
            assert_eq!(table.evaluate(cfg).unwrap(), *q);
        }
        // A config not in the table is a replay error.
        let absent = loop {
            let cfg = space.legalize(&space.random_config(&mut rng));
            if !seen.contains(&cfg) {
                break cfg;
            }
        };
        assert!(matches!(
            table.evaluate(&absent),
            Err(Error::UnknownConfig(_))
        ));
    }

    #[test]
    fn table_rejects_duplicate_rows_naming_both_lines() {
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), u64::MAX);
        let space = oracle.space();
        let mut rng = rng_for(25, "table-dup");
        let cfg_a = space.legalize(&space.random_config(&mut rng));
        let cfg_b = loop {
            let c = space.legalize(&space.random_config(&mut rng));
            if c != cfg_a {
                break c;
            }
        };
        let q = oracle.evaluate_unmetered(&cfg_a).unwrap();
        let items = vec![
            (cfg_a.clone(), q),
            (cfg_b.clone(), oracle.evaluate_unmetered(&cfg_b).unwrap()),
            (cfg_a.clone(), q),
        ];
        let mut buf = Vec::new();
        save_table(space, &items, &mut buf).unwrap();
        match TableOracle::load(space, buf.as_slice(), 100) {
            Err(Error::DuplicateKey { first, second }) => {
                assert_eq!((first, second), (2, 4));
            }
            other => panic!("expected duplicate-key error, got {other:?}"),
        }
    }

    #[test]
    fn table_rejects_malformed_rows() {
        let space = DesignSpace::builtin();
        // Wrong header.
        let bad_header = "a,b,c\n1,2,3\n";
        assert!(TableOracle::load(&space, bad_header.as_bytes(), 10).is_err());
        // Right header, bad value field.
        let oracle = SyntheticOracle::new(SyntheticOracleParams::default(), 10);
        let mut rng = rng_for(26, "table-bad");
        let cfg = space.legalize(&space.random_config(&mut rng));
        let q = oracle.evaluate_unmetered(&cfg).unwrap();
        let mut buf = Vec::new();
        save_table(&space, &[(cfg, q)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("0.", "zz.");
        let err = TableOracle::load(&space, text.as_bytes(), 10).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }
}
