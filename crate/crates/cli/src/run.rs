use std::fs;
use std::path::{Path, PathBuf};

use tbq_core::ball_cover::{cover_statistics, derive_cover_params};
use tbq_core::corpus::{self, Preset};
use tbq_core::dyadic::{build_system, verify_system, CubeId, CHRIST_RULE, REFERENCE_RULE};
use tbq_core::random_dyadic::{badness_probability, boundary_probability, goodness_exponent, sample_random_system, ReferenceFrame};
use tbq_core::rng::trial_seed;
use tbq_core::space::{default_eps_grid, validate_quasimetric, PointCloud};
use tbq_core::tb::{cube_cloud, tb_check, InstanceBundle, TbInstance};
use tbq_core::{Error, Result};

use crate::args::*;
use crate::report;

/// Fixed numeric format of every CSV cell: 12 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.11e}")
}

/// Output location of a command.
pub struct Ctx {
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn write(&self, p: &Path, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
        let full = self.path(p);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&full, text)?;
        written.push(full);
        Ok(())
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::invalid(format!("cannot read {}: {e}", p.display())))
}

/// The cloud of a Monte Carlo command with its quasimetric constant.
fn load_source(src: &Source, seed: u64) -> Result<(PointCloud, f64)> {
    match &src.cloud {
        Some(p) => {
            let cloud = PointCloud::from_json(&read(p)?)?;
            let a0 = validate_quasimetric(&cloud, &[])?.a0;
            Ok((cloud, a0))
        }
        None => {
            let inst = corpus::build(src.preset.parse::<Preset>()?, src.n, seed)?;
            let a0 = match inst.a0 {
                Some(a) => a,
                None => validate_quasimetric(&inst.cloud, &[])?.a0,
            };
            Ok((inst.cloud, a0))
        }
    }
}

/// Runs `cmd` and returns every file it wrote.
pub fn execute(cmd: &Cmd, ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match cmd {
        Cmd::Space(SpaceCmd::Gen(a)) => {
            let inst = corpus::build(a.kind.parse::<Preset>()?, a.n, a.seed)?;
            ctx.write(&a.out, &inst.cloud.to_json(), &mut written)?;
        }
        Cmd::Space(SpaceCmd::Validate(a)) => {
            let cloud = PointCloud::from_json(&read(&a.cloud)?)?;
            let cert = validate_quasimetric(&cloud, &default_eps_grid())?;
            ctx.write(&a.out, &serde_json::to_string_pretty(&cert)?, &mut written)?;
        }
        Cmd::Dyadic(DyadicCmd::Build(a)) => {
            let rule = match a.rule.as_str() {
                "christ" => CHRIST_RULE,
                "reference" => REFERENCE_RULE,
                other => return Err(Error::invalid(format!("unknown rule {other:?}; expected christ or reference"))),
            };
            let cloud = PointCloud::from_json(&read(&a.cloud)?)?;
            let a0 = validate_quasimetric(&cloud, &[])?.a0;
            let (cubes, beta) = cube_cloud(&cloud, a0)?;
            let sys = build_system(&cubes, a.delta, a.sep_factor, rule)?;
            let rep = verify_system(&cubes, &sys)?;
            log::info!("{} levels, {} cubes, beta {beta}, inner ratio {}", rep.levels, rep.cubes, rep.inner_ratio);
            ctx.write(&a.out, &sys.to_json(), &mut written)?;
        }
        Cmd::Mc(McCmd::Boundary(a)) => {
            let (cloud, a0) = load_source(&a.source, a.seed)?;
            let (cubes, _) = cube_cloud(&cloud, a0)?;
            let frame = ReferenceFrame::new(&cubes, a.delta)?;
            let x = a.point.unwrap_or(cubes.n() / 2);
            let rep = boundary_probability(&cubes, &frame, x, a.k, &a.eps, a.trials, a.seed)?;
            let mut csv = String::from("eps,hits,trials,freq,ci_lo,ci_hi\n");
            for r in &rep.rows {
                csv += &format!("{},{},{},{},{},{}\n", num(r.eps), r.p.hits, r.p.trials, num(r.p.freq), num(r.p.ci_lo), num(r.p.ci_hi));
            }
            ctx.write(&a.out, &csv, &mut written)?;
        }
        Cmd::Mc(McCmd::Badness(a)) => {
            let (cloud, a0) = load_source(&a.source, a.seed)?;
            let (cubes, _) = cube_cloud(&cloud, a0)?;
            let frame = ReferenceFrame::new(&cubes, a.delta)?;
            let sys = sample_random_system(&cubes, &frame, a.seed)?.system;
            if !sys.has_gen(a.gen) || a.idx >= sys.level(a.gen).centers.len() {
                return Err(Error::invalid(format!("no cube ({}, {}) in the sampled system", a.gen, a.idx)));
            }
            let q = CubeId { gen: a.gen, idx: a.idx };
            let gamma = goodness_exponent(a.alpha, a.dim);
            let rows = badness_probability(&cubes, &frame, &sys, q, &a.r, gamma, a.trials, trial_seed(a.seed, u64::MAX))?;
            let mut csv = String::from("r,hits,trials,freq,ci_lo,ci_hi\n");
            for (r, p) in rows {
                csv += &format!("{r},{},{},{},{},{}\n", p.hits, p.trials, num(p.freq), num(p.ci_lo), num(p.ci_hi));
            }
            ctx.write(&a.out, &csv, &mut written)?;
        }
        Cmd::Mc(McCmd::Cover(a)) => {
            let (cloud, _) = load_source(&a.source, a.seed)?;
            let cert = validate_quasimetric(&cloud, &default_eps_grid())?;
            let params = derive_cover_params(&cloud, &cert, a.theta, a.upsilon, a.k, a.pilot_trials, a.seed)?;
            let stats = cover_statistics(&cloud, a.k, &params, a.trials, trial_seed(a.seed, u64::MAX))?;
            let mut csv = String::from("point,coverage,ci_lo,ci_hi,buffer\n");
            for (x, (c, b)) in stats.coverage.iter().zip(&stats.buffer).enumerate() {
                csv += &format!("{x},{},{},{},{}\n", num(c.freq), num(c.ci_lo), num(c.ci_hi), num(b.freq));
            }
            ctx.write(&a.out, &csv, &mut written)?;
        }
        Cmd::Tb(TbCmd::Check(a)) => {
            let bundle: InstanceBundle = serde_json::from_str(&read(&a.instance)?)?;
            let inst = TbInstance::from_bundle(&bundle)?;
            let mut o = bundle.options.clone().unwrap_or_default();
            if let Some(v) = a.r {
                o.r = v;
            }
            if let Some(v) = a.kappa {
                o.kappa = v;
            }
            if let Some(v) = a.lambda {
                o.wbp_dilation = v;
            }
            if let Some(v) = a.eps {
                o.eps = v;
            }
            if let Some(v) = a.upsilon {
                o.upsilon = v;
            }
            if let Some(v) = a.delta {
                o.delta = v;
            }
            if let Some(v) = a.alpha {
                o.alpha = v;
            }
            if let Some(v) = a.kernel_const {
                o.kernel_const = v;
            }
            if let Some(v) = &a.r_decay {
                o.r_decay = v.clone();
            }
            if let Some(v) = a.surgery_pairs {
                o.surgery_pairs = v;
            }
            o.paraproduct &= !a.no_paraproduct;
            o.separated_bound &= !a.no_separated_bound;
            let rep = tb_check(&inst, &o, &a.seeds)?;
            ctx.write(&a.out, &serde_json::to_string_pretty(&rep)?, &mut written)?;
            ctx.write(&a.out.with_extension("csv"), &rep.to_csv(), &mut written)?;
        }
        Cmd::Corpus(a) => {
            let inst = corpus::build(a.preset.parse::<Preset>()?, a.n, a.seed)?;
            ctx.write(&a.out, &serde_json::to_string_pretty(&inst.to_bundle(None))?, &mut written)?;
        }
        Cmd::Report(a) => {
            for (name, text) in report::build(&a.inputs, &a.out)? {
                ctx.write(&name, &text, &mut written)?;
            }
        }
        Cmd::Replay(_) => unreachable!("replay is handled by the manifest module"),
    }
    Ok(written)
}

/// Files a command reads.
pub fn inputs(cmd: &Cmd) -> Vec<PathBuf> {
    match cmd {
        Cmd::Space(SpaceCmd::Validate(a)) => vec![a.cloud.clone()],
        Cmd::Dyadic(DyadicCmd::Build(a)) => vec![a.cloud.clone()],
        Cmd::Mc(McCmd::Boundary(BoundaryArgs { source, .. }))
        | Cmd::Mc(McCmd::Badness(BadnessArgs { source, .. }))
        | Cmd::Mc(McCmd::Cover(CoverArgs { source, .. })) => source.cloud.iter().cloned().collect(),
        Cmd::Tb(TbCmd::Check(a)) => vec![a.instance.clone()],
        Cmd::Report(a) => a.inputs.clone(),
        _ => Vec::new(),
    }
}

/// Rewrites every input path through `f`.
pub fn map_inputs(cmd: &mut Cmd, f: impl Fn(&Path) -> PathBuf) {
    match cmd {
        Cmd::Space(SpaceCmd::Validate(a)) => a.cloud = f(&a.cloud),
        Cmd::Dyadic(DyadicCmd::Build(a)) => a.cloud = f(&a.cloud),
        Cmd::Mc(McCmd::Boundary(BoundaryArgs { source, .. }))
        | Cmd::Mc(McCmd::Badness(BadnessArgs { source, .. }))
        | Cmd::Mc(McCmd::Cover(CoverArgs { source, .. })) => {
            if let Some(p) = &source.cloud {
                source.cloud = Some(f(p));
            }
        }
        Cmd::Tb(TbCmd::Check(a)) => a.instance = f(&a.instance),
        Cmd::Report(a) => a.inputs = a.inputs.iter().map(|p| f(p)).collect(),
        _ => {}
    }
}

/// The primary output path of a command.
pub fn out_mut(cmd: &mut Cmd) -> Option<&mut PathBuf> {
    match cmd {
        Cmd::Space(SpaceCmd::Gen(a)) => Some(&mut a.out),
        Cmd::Space(SpaceCmd::Validate(a)) => Some(&mut a.out),
        Cmd::Dyadic(DyadicCmd::Build(a)) => Some(&mut a.out),
        Cmd::Mc(McCmd::Boundary(a)) => Some(&mut a.out),
        Cmd::Mc(McCmd::Badness(a)) => Some(&mut a.out),
        Cmd::Mc(McCmd::Cover(a)) => Some(&mut a.out),
        Cmd::Tb(TbCmd::Check(a)) => Some(&mut a.out),
        Cmd::Corpus(a) => Some(&mut a.out),
        Cmd::Report(a) => Some(&mut a.out),
        Cmd::Replay(_) => None,
    }
}

pub fn seed(cmd: &Cmd) -> Option<u64> {
    match cmd {
        Cmd::Space(SpaceCmd::Gen(a)) => Some(a.seed),
        Cmd::Mc(McCmd::Boundary(a)) => Some(a.seed),
        Cmd::Mc(McCmd::Badness(a)) => Some(a.seed),
        Cmd::Mc(McCmd::Cover(a)) => Some(a.seed),
        Cmd::Tb(TbCmd::Check(a)) => a.seeds.first().copied(),
        Cmd::Corpus(a) => Some(a.seed),
        _ => None,
    }
}
