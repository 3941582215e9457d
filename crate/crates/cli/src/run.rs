//! Scenario runners. Each validates its table, computes, and returns a
//! [`ResultSet`]; nothing touches the disk here.

use esp_core::circuit::{
    dsa_optimize, impedance_matrix, mode_target, precoder_report, scatterer_channel, DipoleArray, DsaConfig,
    DsaOptions, GradientMethod, PointScatterer,
};
use esp_core::dof::{dof_link, dof_unbounded, ApertureGeometry, DofMethod, LinkGeometry, LinkMethod};
use esp_core::em::{Medium, Vec3};
use esp_core::linalg::{complex_normal, random_unitary, wrap_pm_pi, CMat};
use esp_core::modes::{
    count_dof, coupling_matrix, matrix_capacity, mode_decomposition, optimal_scatter_matrix, water_filling,
    DofCriterion, SampledSpace,
};
use esp_core::ris::{hemisphere_grid, pattern_peak, Angle, RisPanel};
use esp_core::scm::{bootstrap_snr, convergence_iteration, median, median_snr, LinkCampaign, Modulation};
use esp_core::sim::{
    bin_angle, dft_target, doa_estimate, doa_target, plane_wave, sim_loss, sim_response, sim_train, SimStack,
    TrainResult, TrainSchedule,
};
use esp_core::{rng, Complex64, EspError};
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{self, Kind, LinkShape, Scenario, Target};
use crate::error::CliError;
use crate::output::{ResultSet, Table};

type Res<T> = Result<T, CliError>;

fn positive(path: &str, v: f64) -> Res<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::invalid(path, format!("must be finite and > 0, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Res<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CliError::invalid(path, format!("must be finite and >= 0, got {v}")))
    }
}

fn finite(path: &str, v: f64) -> Res<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CliError::invalid(path, "must be finite"))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Res<()> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::invalid(path, format!("must be >= {min}, got {v}")))
    }
}

fn non_empty<T>(path: &str, v: &[T]) -> Res<()> {
    if v.is_empty() {
        Err(CliError::invalid(path, "must not be empty"))
    } else {
        Ok(())
    }
}

fn all_positive(path: &str, v: &[f64]) -> Res<()> {
    non_empty(path, v)?;
    v.iter()
        .enumerate()
        .try_for_each(|(i, x)| positive(&format!("{path}[{i}]"), *x))
}

fn core<T>(prefix: &str, r: esp_core::Result<T>) -> Res<T> {
    r.map_err(|e| CliError::from_core(prefix, e))
}

/// Top-level checks shared by every kind.
pub fn validate(scenario: &Scenario, requested: Kind) -> Res<()> {
    if scenario.schema != config::SCHEMA_VERSION {
        return Err(CliError::invalid(
            "schema",
            format!(
                "unsupported schema {}, expected {}",
                scenario.schema,
                config::SCHEMA_VERSION
            ),
        ));
    }
    if scenario.kind != requested {
        return Err(CliError::invalid(
            "kind",
            format!(
                "scenario is `{}` but `{}` was requested",
                scenario.kind.name(),
                requested.name()
            ),
        ));
    }
    non_empty("seeds", &scenario.seeds)?;
    positive("wavelength", scenario.wavelength)?;
    let present = [
        (Kind::DofTable, scenario.dof_table.is_some()),
        (Kind::Modes, scenario.modes.is_some()),
        (Kind::DsaPrecoder, scenario.dsa_precoder.is_some()),
        (Kind::SimTrain, scenario.sim_train.is_some()),
        (Kind::SimDoa, scenario.sim_doa.is_some()),
        (Kind::RisPattern, scenario.ris_pattern.is_some()),
        (Kind::ScmLink, scenario.scm_link.is_some()),
    ];
    for (kind, here) in present {
        if kind == requested && !here {
            return Err(CliError::invalid(kind.name(), "table is missing"));
        }
        if kind != requested && here {
            return Err(CliError::invalid(
                kind.name(),
                format!("table not used by `{}`", requested.name()),
            ));
        }
    }
    Ok(())
}

pub fn run(scenario: &Scenario) -> Res<ResultSet> {
    let medium = core("wavelength", Medium::free_space(scenario.wavelength))?;
    let seeds = &scenario.seeds;
    match scenario.kind {
        Kind::DofTable => dof_table(scenario.dof_table.as_ref().unwrap(), &medium, seeds),
        Kind::Modes => modes(scenario.modes.as_ref().unwrap(), &medium, seeds),
        Kind::DsaPrecoder => dsa_precoder(scenario.dsa_precoder.as_ref().unwrap(), &medium, seeds),
        Kind::SimTrain => sim_train_run(scenario.sim_train.as_ref().unwrap(), &medium, seeds),
        Kind::SimDoa => sim_doa(scenario.sim_doa.as_ref().unwrap(), &medium, seeds),
        Kind::RisPattern => ris_pattern(scenario.ris_pattern.as_ref().unwrap(), &medium, seeds),
        Kind::ScmLink => scm_link(scenario.scm_link.as_ref().unwrap(), seeds),
    }
}

fn aperture(dimension: u32, side: f64) -> ApertureGeometry {
    match dimension {
        1 => ApertureGeometry::Segment { length: side },
        2 => ApertureGeometry::square(side),
        _ => ApertureGeometry::cube(side),
    }
}

fn dof_table(p: &config::DofTable, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    all_positive("dof-table.lengths", &p.lengths)?;
    if !(1..=3).contains(&p.dimension) {
        return Err(CliError::invalid("dof-table.dimension", "must be 1, 2 or 3"));
    }
    if let Some(link) = &p.link {
        positive("dof-table.link.lt", link.lt)?;
        positive("dof-table.link.lr", link.lr)?;
        all_positive("dof-table.link.distances", &link.distances)?;
    }
    let lam = medium.wavelength();
    let mut rows = vec![];
    for &l in &p.lengths {
        let g = aperture(p.dimension, l);
        let formula = core("dof-table", dof_unbounded(&g, medium, DofMethod::Formula))?.value;
        let lattice = core("dof-table", dof_unbounded(&g, medium, DofMethod::Lattice))?.value;
        rows.push((l / lam, formula, lattice));
    }
    let mut link_rows = vec![];
    if let Some(link) = &p.link {
        for &d in &link.distances {
            let g = match link.shape {
                LinkShape::Segments => LinkGeometry::Segments {
                    lt: link.lt,
                    lr: link.lr,
                    d,
                },
                LinkShape::Squares => LinkGeometry::Squares {
                    at: link.lt * link.lt,
                    ar: link.lr * link.lr,
                    d,
                },
            };
            let classic = core("dof-table.link", dof_link(&g, medium, LinkMethod::Classic))?.value;
            let corrected = core("dof-table.link", dof_link(&g, medium, LinkMethod::Corrected))?.value;
            link_rows.push((d / lam, classic, corrected, g.zeta()));
        }
    }

    let mut out = ResultSet::new();
    let mut table = Table::new("dof", &["length_lambda", "formula_dof", "lattice_dof"]);
    let mut link_table = Table::new("link", &["distance_lambda", "classic_dof", "corrected_dof", "zeta"]);
    let (l_max, _, lattice_max) = *rows.last().unwrap();
    for &seed in seeds {
        for &(l, f, n) in &rows {
            table.push(seed, vec![l.into(), f.into(), n.into()]);
        }
        for &(d, c, k, z) in &link_rows {
            link_table.push(seed, vec![d.into(), c.into(), k.into(), z.into()]);
        }
        out.run(
            seed,
            true,
            json!({ "largest_length_lambda": l_max, "lattice_ratio": lattice_max / (2.0 * l_max).powi(p.dimension as i32) }),
        );
    }
    out.tables.push(table);
    if p.link.is_some() {
        out.tables.push(link_table);
    }
    Ok(out)
}

fn modes(p: &config::Modes, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    positive("modes.tx_length", p.tx_length)?;
    positive("modes.distance", p.distance)?;
    all_positive("modes.rx_ratios", &p.rx_ratios)?;
    if let Some(pitch) = p.pitch {
        positive("modes.pitch", pitch)?;
    }
    positive("modes.element_length", p.element_length)?;
    positive("modes.threshold_db", p.threshold_db)?;
    positive("modes.noise_power", p.noise_power)?;
    positive("modes.total_power", p.total_power)?;
    if let Some(c) = &p.cascade {
        at_least("modes.cascade.instances", c.instances, 1)?;
        at_least("modes.cascade.size", c.size, 1)?;
        at_least("modes.cascade.random_unitaries", c.random_unitaries, 1)?;
        positive("modes.cascade.noise_power", c.noise_power)?;
        positive("modes.cascade.total_power", c.total_power)?;
    }
    let lam = medium.wavelength();
    let pitch = p.pitch.unwrap_or_else(|| SampledSpace::default_pitch(medium));
    let tx = core(
        "modes",
        SampledSpace::segment(
            Vec3::zeros(),
            Vec3::x(),
            p.tx_length,
            pitch,
            Vec3::z(),
            p.element_length,
            medium,
        ),
    )?;
    struct Point {
        ratio: f64,
        length: f64,
        dof: usize,
        capacity: f64,
        sv: Vec<f64>,
        powers: Vec<f64>,
    }
    let points = p
        .rx_ratios
        .par_iter()
        .map(|&ratio| {
            let length = ratio * p.distance;
            let rx = core(
                "modes",
                SampledSpace::segment(
                    Vec3::new(0.0, p.distance, 0.0),
                    Vec3::x(),
                    length,
                    pitch,
                    Vec3::z(),
                    p.element_length,
                    medium,
                ),
            )?;
            let dec = core(
                "modes",
                coupling_matrix(&tx, &rx, medium).and_then(|h| mode_decomposition(&h)),
            )?;
            let dof = core("modes", count_dof(&dec, DofCriterion::ThresholdDb(p.threshold_db)))?;
            let gains: Vec<f64> = dec.gains().into_iter().filter(|g| *g > 0.0).collect();
            let alloc = core("modes", water_filling(&gains, p.noise_power, p.total_power))?;
            let capacity = gains
                .iter()
                .zip(&alloc.powers)
                .map(|(g, q)| (1.0 + q * g / p.noise_power).log2())
                .sum();
            Ok(Point {
                ratio,
                length,
                dof,
                capacity,
                sv: dec.singular_values.to_vec(),
                powers: alloc.powers,
            })
        })
        .collect::<Res<Vec<_>>>()?;

    let mut out = ResultSet::new();
    let mut summary = Table::new("modes", &["rx_ratio", "rx_length_lambda", "dof", "capacity_bits"]);
    let mut spectrum = Table::new(
        "singular_values",
        &["rx_ratio", "index", "singular_value", "relative_db", "power"],
    );
    let mut cascade = Table::new(
        "cascade",
        &["instance", "optimal_capacity", "best_random_capacity", "margin"],
    );
    for &seed in seeds {
        for pt in &points {
            summary.push(
                seed,
                vec![
                    pt.ratio.into(),
                    (pt.length / lam).into(),
                    pt.dof.into(),
                    pt.capacity.into(),
                ],
            );
            let s1 = pt.sv.first().copied().unwrap_or(0.0);
            for (i, s) in pt.sv.iter().enumerate() {
                let power = pt.powers.get(i).copied().unwrap_or(0.0);
                let rel = 20.0 * (s / s1).log10();
                spectrum.push(
                    seed,
                    vec![pt.ratio.into(), (i + 1).into(), (*s).into(), rel.into(), power.into()],
                );
            }
        }
        let mut beaten = 0usize;
        if let Some(c) = &p.cascade {
            let results = (0..c.instances)
                .into_par_iter()
                .map(|i| {
                    let mut g = rng::stream("modes-cascade", seed, i as u64);
                    let h_t = CMat::from_fn(c.size, c.size, |_, _| complex_normal(&mut g, 1.0));
                    let h_r = CMat::from_fn(c.size, c.size, |_, _| complex_normal(&mut g, 1.0));
                    let r = core("modes.cascade", optimal_scatter_matrix(&h_t, &h_r))?.r;
                    let best = core(
                        "modes.cascade",
                        matrix_capacity(&(&h_r * &r * &h_t), c.noise_power, c.total_power),
                    )?;
                    let mut top = f64::NEG_INFINITY;
                    for _ in 0..c.random_unitaries {
                        let q = random_unitary(&mut g, c.size);
                        let cap = core(
                            "modes.cascade",
                            matrix_capacity(&(&h_r * &q * &h_t), c.noise_power, c.total_power),
                        )?;
                        top = top.max(cap);
                    }
                    Ok((best, top))
                })
                .collect::<Res<Vec<_>>>()?;
            for (i, (best, top)) in results.into_iter().enumerate() {
                if top > best {
                    beaten += 1;
                }
                cascade.push(seed, vec![i.into(), best.into(), top.into(), (best - top).into()]);
            }
        }
        let last = points.last().unwrap();
        let mut metrics = json!({ "dof_at_largest_ratio": last.dof, "capacity_at_largest_ratio": last.capacity });
        if p.cascade.is_some() {
            metrics["cascade_instances_beaten"] = json!(beaten);
        }
        out.run(seed, true, metrics);
    }
    out.tables.push(summary);
    out.tables.push(spectrum);
    if p.cascade.is_some() {
        out.tables.push(cascade);
    }
    Ok(out)
}

fn vec3(path: &str, v: [f64; 3]) -> Res<Vec3> {
    v.iter()
        .enumerate()
        .try_for_each(|(i, x)| finite(&format!("{path}[{i}]"), *x))?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn dsa_precoder(p: &config::DsaPrecoder, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    at_least("dsa-precoder.rings", p.rings, 1)?;
    positive("dsa-precoder.spacing", p.spacing)?;
    positive("dsa-precoder.element_length", p.element_length)?;
    finite("dsa-precoder.self_reactance", p.self_reactance)?;
    at_least("dsa-precoder.n_active", p.n_active, 1)?;
    positive("dsa-precoder.power", p.power)?;
    at_least("dsa-precoder.max_iterations", p.max_iterations, 1)?;
    positive("dsa-precoder.tolerance", p.tolerance)?;
    let center = vec3("dsa-precoder.receiver.center", p.receiver.center)?;
    let axis = vec3("dsa-precoder.receiver.axis", p.receiver.axis)?;
    if axis.norm() == 0.0 {
        return Err(CliError::invalid("dsa-precoder.receiver.axis", "must be non-zero"));
    }
    positive("dsa-precoder.receiver.length", p.receiver.length)?;
    positive("dsa-precoder.receiver.pitch", p.receiver.pitch)?;
    non_empty("dsa-precoder.scatterers", &p.scatterers)?;
    let mut scatterers = vec![];
    for (i, s) in p.scatterers.iter().enumerate() {
        let path = format!("dsa-precoder.scatterers[{i}]");
        let position = vec3(&format!("{path}.position"), s.position)?;
        finite(&format!("{path}.reflectivity[0]"), s.reflectivity[0])?;
        finite(&format!("{path}.reflectivity[1]"), s.reflectivity[1])?;
        scatterers.push(PointScatterer {
            position,
            orientation: Vec3::z(),
            reflectivity: Complex64::new(s.reflectivity[0], s.reflectivity[1]),
        });
    }
    let array = core(
        "dsa-precoder",
        DipoleArray::hexagonal(p.rings, p.spacing, Vec3::z(), p.element_length, p.self_reactance),
    )?;
    if p.n_active > array.len() {
        return Err(CliError::invalid(
            "dsa-precoder.n_active",
            format!("must not exceed the {} array elements", array.len()),
        ));
    }
    if p.n_active > scatterers.len() {
        return Err(CliError::invalid(
            "dsa-precoder.n_active",
            format!("channel rank is at most {} (one per scatterer)", scatterers.len()),
        ));
    }
    let rx = core(
        "dsa-precoder.receiver",
        SampledSpace::segment(
            center,
            axis,
            p.receiver.length,
            p.receiver.pitch,
            Vec3::z(),
            p.element_length,
            medium,
        ),
    )?;
    let z = core("dsa-precoder", impedance_matrix(&array, medium))?;
    let h = core("dsa-precoder", scatterer_channel(&array, &scatterers, &rx, medium))?;
    let config = core("dsa-precoder", DsaConfig::new(array.len(), p.n_active))?;
    let (target, ideal) = core("dsa-precoder", mode_target(&z, &h, p.n_active, p.power))?;

    let mut out = ResultSet::new();
    let mut loads = Table::new("loads", &["port", "active", "reactance_ohm"]);
    let mut history = Table::new("history", &["iteration", "objective"]);
    let mut mode_table = Table::new("modes", &["mode", "ideal_gain", "gain_loss_db"]);
    for &seed in seeds {
        let opts = DsaOptions {
            power: p.power,
            max_iterations: p.max_iterations,
            restarts: p.restarts,
            seed,
            gradient: match p.gradient {
                config::Gradient::Analytic => GradientMethod::Analytic,
                config::Gradient::FiniteDifference => GradientMethod::FiniteDifference,
            },
            tolerance: p.tolerance,
        };
        let sol = core("dsa-precoder", dsa_optimize(&z, &config, &h, &target, &opts))?;
        let rep = core("dsa-precoder", precoder_report(&z, &config, &h, &sol, &ideal))?;
        for (k, t) in sol.loads.reactance.iter().enumerate() {
            loads.push(seed, vec![k.into(), (k < p.n_active).into(), (*t).into()]);
        }
        for (i, v) in sol.history.iter().enumerate() {
            history.push(seed, vec![i.into(), (*v).into()]);
        }
        for (n, (g, l)) in rep.ideal_gain.iter().zip(&rep.gain_loss_db).enumerate() {
            mode_table.push(seed, vec![(n + 1).into(), (*g).into(), (*l).into()]);
        }
        out.run(
            seed,
            sol.converged,
            json!({
                "elements": array.len(),
                "residual": sol.residual,
                "leakage_db": rep.leakage_db,
                "max_gain_loss_db": rep.gain_loss_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                "iterations": sol.iterations,
                "restart": sol.restart,
                "symmetry_error": z.symmetry_error(),
                "min_resistance_eigenvalue": z.min_resistance_eigenvalue(),
            }),
        );
    }
    out.tables.extend([loads, history, mode_table]);
    Ok(out)
}

fn build_stack(prefix: &str, s: &config::Stack, medium: &Medium) -> Res<SimStack> {
    at_least(&format!("{prefix}.stack.layers"), s.layers, 1)?;
    at_least(&format!("{prefix}.stack.side"), s.side, 1)?;
    positive(&format!("{prefix}.stack.atom_spacing"), s.atom_spacing)?;
    positive(&format!("{prefix}.stack.layer_spacing"), s.layer_spacing)?;
    at_least(&format!("{prefix}.stack.antennas"), s.antennas, 1)?;
    let stack = SimStack::new(s.layers, s.side, s.atom_spacing, s.layer_spacing, s.antennas, *medium);
    core(&format!("{prefix}.stack"), stack)
}

fn schedule(prefix: &str, s: &config::Schedule) -> Res<TrainSchedule> {
    let sched = TrainSchedule {
        learning_rate: s.learning_rate,
        decay: s.decay,
        max_iterations: s.max_iterations,
        stop_threshold: s.stop_threshold,
        learn_scale: s.learn_scale,
        reject_increase: s.reject_increase,
    };
    core(&format!("{prefix}.schedule"), sched.validate())?;
    Ok(sched)
}

fn push_training(history: &mut Table, phases: &mut Table, seed: u64, r: &TrainResult, norm: f64) {
    for (i, v) in r.history.iter().enumerate() {
        history.push(seed, vec![i.into(), (*v).into(), (v / norm).into()]);
    }
    for l in 0..r.phases.layers() {
        for m in 0..r.phases.theta.ncols() {
            phases.push(seed, vec![(l + 1).into(), m.into(), r.phases.theta[(l, m)].into()]);
        }
    }
}

fn train_all(stack: &SimStack, target: &CMat, sched: &TrainSchedule, seeds: &[u64]) -> Res<Vec<TrainResult>> {
    seeds
        .par_iter()
        .map(|&s| {
            sim_train(stack, target, sched, s).map_err(|e| match e {
                EspError::Diverged { .. } => CliError::NotConverged(e.to_string()),
                other => CliError::from_core("sim", other),
            })
        })
        .collect()
}

fn sim_train_run(p: &config::SimTrain, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    let stack = build_stack("sim-train", &p.stack, medium)?;
    let sched = schedule("sim-train", &p.schedule)?;
    if let Some(b) = p.quantize_bits {
        if !(1..=16).contains(&b) {
            return Err(CliError::invalid("sim-train.quantize_bits", "must lie in 1..=16"));
        }
    }
    let target = match p.target {
        Target::Dft => {
            if p.stack.antennas != stack.atoms() {
                return Err(CliError::invalid(
                    "sim-train.stack.antennas",
                    "the dft target needs as many antennas as atoms per layer",
                ));
            }
            core("sim-train.stack", dft_target(p.stack.antennas))?
        }
        Target::Doa => core("sim-train.stack", doa_target(p.stack.antennas, stack.atoms()))?,
    };
    let norm = target.norm_squared();
    let results = train_all(&stack, &target, &sched, seeds)?;

    let mut out = ResultSet::new();
    let mut history = Table::new("history", &["iteration", "loss", "normalized_loss"]);
    let mut phases = Table::new("phases", &["layer", "atom", "phase_rad"]);
    for (&seed, r) in seeds.iter().zip(&results) {
        push_training(&mut history, &mut phases, seed, r, norm);
        let mut metrics = json!({
            "final_loss": r.final_loss(),
            "normalized_loss": r.final_loss() / norm,
            "iterations": r.iterations,
            "scale_re": r.scale.re,
            "scale_im": r.scale.im,
        });
        if let Some(b) = p.quantize_bits {
            let q = core("sim-train", r.phases.quantized(b))?;
            let (loss, _) = core("sim-train", sim_loss(&stack, &q, &target, sched.learn_scale))?;
            metrics["quantized_normalized_loss"] = json!(loss / norm);
        }
        out.run(seed, r.converged, metrics);
    }
    out.tables.extend([history, phases]);
    Ok(out)
}

fn sim_doa(p: &config::SimDoa, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    let stack = build_stack("sim-doa", &p.stack, medium)?;
    let sched = schedule("sim-doa", &p.schedule)?;
    non_empty("sim-doa.snr_db", &p.snr_db)?;
    p.snr_db
        .iter()
        .enumerate()
        .try_for_each(|(i, s)| finite(&format!("sim-doa.snr_db[{i}]"), *s))?;
    at_least("sim-doa.trials", p.trials, 1)?;
    at_least("sim-doa.snapshots", p.snapshots, 1)?;
    let target = core("sim-doa.stack", doa_target(p.stack.antennas, stack.atoms()))?;
    let grid = (p.stack.antennas as f64).sqrt().round() as usize;
    let norm = target.norm_squared();
    let results = train_all(&stack, &target, &sched, seeds)?;

    let mut out = ResultSet::new();
    let mut history = Table::new("history", &["iteration", "loss", "normalized_loss"]);
    let mut phases = Table::new("phases", &["layer", "atom", "phase_rad"]);
    let mut grid_table = Table::new("grid", &["kx", "ky", "detected_kx", "detected_ky", "correct"]);
    let mut mse_table = Table::new("mse", &["snr_db", "mse_rad2", "std_error"]);
    for (&seed, r) in seeds.iter().zip(&results) {
        push_training(&mut history, &mut phases, seed, r, norm);
        let mut g = rng::stream("sim-doa-grid", seed, 0);
        let mut hits = 0usize;
        for ky in 0..grid {
            for kx in 0..grid {
                let z = plane_wave(p.stack.side, bin_angle(kx, grid), bin_angle(ky, grid));
                let est = core("sim-doa", doa_estimate(&stack, &r.phases, &z, 0.0, 1, &mut g))?;
                let ok = est.bin == (kx, ky);
                hits += ok as usize;
                grid_table.push(
                    seed,
                    vec![kx.into(), ky.into(), est.bin.0.into(), est.bin.1.into(), ok.into()],
                );
            }
        }
        let response = &stack.readout * core("sim-doa", sim_response(&stack, &r.phases))?;
        let mut curve = vec![];
        for &snr in &p.snr_db {
            // trial t sees the same angles and noise draws at every SNR
            let errors = (0..p.trials)
                .into_par_iter()
                .map(|t| {
                    let mut g = rng::stream("sim-doa", seed, t as u64);
                    let (px, py) = (
                        g.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                        g.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    );
                    let z = plane_wave(p.stack.side, px, py);
                    let signal = (&response * &z).norm_squared() / p.stack.antennas as f64;
                    let noise = signal / 10f64.powf(snr / 10.0);
                    let est = core(
                        "sim-doa",
                        doa_estimate(&stack, &r.phases, &z, noise, p.snapshots, &mut g),
                    )?;
                    let (ex, ey) = (wrap_pm_pi(est.psi_x - px), wrap_pm_pi(est.psi_y - py));
                    Ok(0.5 * (ex * ex + ey * ey))
                })
                .collect::<Res<Vec<f64>>>()?;
            let n = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let var = if errors.len() > 1 {
                errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let se = (var / n).sqrt();
            mse_table.push(seed, vec![snr.into(), mean.into(), se.into()]);
            curve.push(mean);
        }
        out.run(
            seed,
            r.converged,
            json!({
                "normalized_loss": r.final_loss() / norm,
                "iterations": r.iterations,
                "grid_hits": hits,
                "grid_size": grid * grid,
                "mse_first": curve[0],
                "mse_last": curve[curve.len() - 1],
            }),
        );
    }
    out.tables.extend([history, phases, grid_table, mse_table]);
    Ok(out)
}

fn angle(path: &str, v: [f64; 2]) -> Res<Angle> {
    finite(&format!("{path}[1]"), v[1])?;
    if !(v[0].is_finite() && (0.0..=90.0).contains(&v[0])) {
        return Err(CliError::invalid(
            format!("{path}[0]"),
            "elevation must lie in [0, 90] degrees",
        ));
    }
    core(path, Angle::from_degrees(v[0], v[1]))
}

fn ris_pattern(p: &config::RisPattern, medium: &Medium, seeds: &[u64]) -> Res<ResultSet> {
    at_least("ris-pattern.side", p.side, 1)?;
    positive("ris-pattern.spacing", p.spacing)?;
    if !(p.grid_step_deg.is_finite() && p.grid_step_deg > 0.0 && p.grid_step_deg <= 90.0) {
        return Err(CliError::invalid("ris-pattern.grid_step_deg", "must lie in (0, 90]"));
    }
    if p.beams.is_empty() && p.random_pairs == 0 {
        return Err(CliError::invalid(
            "ris-pattern.beams",
            "need at least one beam or random pair",
        ));
    }
    let mut fixed = vec![];
    for (i, b) in p.beams.iter().enumerate() {
        let inc = angle(&format!("ris-pattern.beams[{i}].incident"), b.incident)?;
        let des = angle(&format!("ris-pattern.beams[{i}].desired"), b.desired)?;
        fixed.push((inc, des));
    }
    let mut probe = core("ris-pattern", RisPanel::new(p.side, p.spacing))?;
    core(
        "ris-pattern.spacing",
        probe.configure(&Angle::broadside(), &Angle::broadside(), medium),
    )?;
    let grid = core("ris-pattern", hemisphere_grid(p.grid_step_deg.to_radians()))?;

    let mut out = ResultSet::new();
    let mut profile = Table::new("profile", &["beam", "i", "j", "phase_rad"]);
    let mut peaks = Table::new(
        "peaks",
        &[
            "beam",
            "incident_elevation_deg",
            "incident_azimuth_deg",
            "desired_elevation_deg",
            "desired_azimuth_deg",
            "peak_elevation_deg",
            "peak_azimuth_deg",
            "offset_deg",
            "peak_value",
        ],
    );
    for &seed in seeds {
        let mut pairs = fixed.clone();
        let mut g = rng::stream("ris-pattern", seed, 0);
        let max_el = 80f64.to_radians();
        for _ in 0..p.random_pairs {
            let inc = core(
                "ris-pattern",
                Angle::new(g.random_range(0.0..max_el), g.random_range(0.0..std::f64::consts::TAU)),
            )?;
            let des = core(
                "ris-pattern",
                Angle::new(g.random_range(0.0..max_el), g.random_range(0.0..std::f64::consts::TAU)),
            )?;
            pairs.push((inc, des));
        }
        let mut worst = 0.0f64;
        for (b, (inc, des)) in pairs.iter().enumerate() {
            let mut panel = core("ris-pattern", RisPanel::new(p.side, p.spacing))?;
            core("ris-pattern", panel.configure(inc, des, medium))?;
            for i in 1..=p.side {
                for j in 1..=p.side {
                    profile.push(
                        seed,
                        vec![b.into(), i.into(), j.into(), panel.phases[(i - 1, j - 1)].into()],
                    );
                }
            }
            let (peak, value) = pattern_peak(&panel, inc, &grid, medium).expect("grid is never empty");
            let offset = peak.separation(des).to_degrees();
            worst = worst.max(offset);
            peaks.push(
                seed,
                vec![
                    b.into(),
                    inc.elevation.to_degrees().into(),
                    inc.azimuth.to_degrees().into(),
                    des.elevation.to_degrees().into(),
                    des.azimuth.to_degrees().into(),
                    peak.elevation.to_degrees().into(),
                    peak.azimuth.to_degrees().into(),
                    offset.into(),
                    value.into(),
                ],
            );
        }
        out.run(seed, true, json!({ "beams": pairs.len(), "max_offset_deg": worst }));
    }
    out.tables.extend([profile, peaks]);
    Ok(out)
}

fn modulation(s: &str) -> Res<Modulation> {
    let m = match s {
        "bpsk" => Modulation::Bpsk,
        "qpsk" => Modulation::Qpsk,
        _ => match s.strip_prefix("psk").and_then(|n| n.parse::<u32>().ok()) {
            Some(n) => Modulation::Psk(n),
            None => {
                return Err(CliError::invalid(
                    "scm-link.modulation",
                    format!("unknown modulation `{s}`"),
                ))
            }
        },
    };
    core("scm-link.modulation", m.validate())?;
    Ok(m)
}

fn scm_link(p: &config::ScmLink, seeds: &[u64]) -> Res<ResultSet> {
    at_least("scm-link.n", p.n, 1)?;
    at_least("scm-link.m", p.m, 1)?;
    all_positive("scm-link.singular_values", &p.singular_values)?;
    if p.singular_values.len() > p.n.min(p.m) {
        return Err(CliError::invalid(
            "scm-link.singular_values",
            "more values than min(n, m)",
        ));
    }
    positive("scm-link.tx_power", p.tx_power)?;
    positive("scm-link.gain", p.gain)?;
    non_negative("scm-link.sensor_noise", p.sensor_noise)?;
    finite("scm-link.snr_max_db", p.snr_max_db)?;
    at_least("scm-link.iterations", p.iterations, 1)?;
    positive("scm-link.convergence_tol_db", p.convergence_tol_db)?;
    let campaign = LinkCampaign {
        n: p.n,
        m: p.m,
        singular_values: p.singular_values.clone(),
        tx_power: p.tx_power,
        gain: p.gain,
        sensor_noise: p.sensor_noise,
        snr_max_db: p.snr_max_db,
        modulation: modulation(&p.modulation)?,
        iterations: p.iterations,
    };
    let trials = core("scm-link", campaign.run(seeds))?;

    let mut out = ResultSet::new();
    let mut traj = Table::new(
        "trajectories",
        &["iteration", "snr_db", "alignment", "sent", "detected"],
    );
    let mut med = Table::aggregate("median", &["iteration", "median_snr_db"]);
    let mut converged = 0usize;
    for t in &trials {
        for (k, r) in t.trajectory.records.iter().enumerate() {
            traj.push(
                t.seed,
                vec![
                    (k + 1).into(),
                    r.snr_db.into(),
                    r.alignment.into(),
                    r.sent.into(),
                    r.detected.into(),
                ],
            );
        }
        let snr = t.trajectory.snr_db();
        let conv = convergence_iteration(&snr, p.snr_max_db, p.convergence_tol_db);
        converged += conv.is_some() as usize;
        out.run(
            t.seed,
            true,
            json!({
                "final_snr_db": snr.last().copied().unwrap_or(f64::NAN),
                "convergence_iteration": conv,
                "symbol_errors": t.trajectory.symbol_errors(),
            }),
        );
    }
    let curve = median_snr(&trials);
    for (k, v) in curve.iter().enumerate() {
        med.push(trials.len() as u64, vec![(k + 1).into(), (*v).into()]);
    }
    let finals: Vec<f64> = trials
        .iter()
        .filter_map(|t| t.trajectory.snr_db().last().copied())
        .collect();
    out.aggregate
        .insert("median_final_snr_db".into(), json!(median(&finals)));
    out.aggregate.insert(
        "converged_fraction".into(),
        json!(converged as f64 / trials.len() as f64),
    );
    out.aggregate.insert("snr_max_db".into(), json!(p.snr_max_db));
    out.aggregate.insert(
        "bootstrap_snr_db".into(),
        json!(core("scm-link", bootstrap_snr(p.snr_max_db, p.n))?),
    );
    out.tables.extend([traj, med]);
    Ok(out)
}
